#include "clio/graph.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "clio/error.hpp"
#include "clio/parsing.hpp"
#include "clio/prompts.hpp"

namespace clio {

// ---------------------------------------------------------------------------
// Fragments

std::string normalize_name(std::string_view name) {
  std::string out;
  bool pending_space = false;
  for (unsigned char c : name) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

bool GraphFragment::has_entity(const std::string& normalized) const {
  return std::any_of(entities.begin(), entities.end(),
                     [&](const auto& e) { return e.name == normalized; });
}

void GraphFragment::add_entity(FragmentEntity e) {
  if (e.display.empty()) e.display = trim(e.name);
  e.name = normalize_name(e.name);
  if (e.name.empty()) return;
  for (auto& existing : entities) {
    if (existing.name != e.name) continue;
    if (existing.type.empty()) existing.type = e.type;
    if (!e.description.empty() && existing.description.find(e.description) == std::string::npos)
      existing.description += existing.description.empty() ? e.description : "; " + e.description;
    return;
  }
  entities.push_back(std::move(e));
}

void GraphFragment::add_relation(FragmentRelation r) {
  const auto source_display = trim(r.source), target_display = trim(r.target);
  r.source = normalize_name(r.source);
  r.target = normalize_name(r.target);
  if (r.source.empty() || r.target.empty()) return;
  if (!has_entity(r.source)) entities.push_back({r.source, "", "", source_display});
  if (!has_entity(r.target)) entities.push_back({r.target, "", "", target_display});
  relations.push_back(std::move(r));
}

void GraphFragment::append(const GraphFragment& other) {
  for (const auto& e : other.entities) add_entity(e);
  for (const auto& r : other.relations) add_relation(r);
}

namespace {

double parse_strength(std::string_view text) {
  auto value = parse_real(trim(text));
  if (!value || *value <= 0.0 || *value > 1.0)
    malformed("relation strength must lie in (0,1]: '" + std::string(text) + "'");
  return *value;
}

}  // namespace

GraphFragment parse_fragment(const ModelResponse& response) {
  GraphFragment fragment;
  if (auto obj = parse_json_object(response.text)) {
    for (const auto& e : obj->value("entities", json::array())) {
      fragment.add_entity({e.value("name", std::string{}), e.value("type", std::string{}),
                           e.value("description", std::string{}), {}});
    }
    for (const auto& r : obj->value("relations", json::array())) {
      double strength = 1.0;
      if (auto it = r.find("strength"); it != r.end()) {
        strength = it->is_number() ? it->get<double>() : parse_strength(it->get<std::string>());
        if (strength <= 0.0 || strength > 1.0) malformed("relation strength must lie in (0,1]");
      }
      fragment.add_relation({r.value("source", std::string{}), r.value("target", std::string{}),
                             r.value("description", std::string{}), strength});
    }
    return fragment;
  }

  const auto kv = parse_key_values(response.text);
  for (const auto& [key, value] : kv) {
    if (key == "entity") {
      auto parts = split_bars(value);
      if (parts[0].empty()) malformed("entity line without a name");
      fragment.add_entity({parts[0], parts.size() > 1 ? parts[1] : "", parts.size() > 2 ? parts[2] : "", {}});
    } else if (key == "relation") {
      auto parts = split_bars(value);
      if (parts.size() < 2 || parts[0].empty() || parts[1].empty())
        malformed("relation line needs 'source | target': '" + value + "'");
      fragment.add_relation({parts[0], parts[1], parts.size() > 2 ? parts[2] : "",
                             parts.size() > 3 ? parse_strength(parts[3]) : 1.0});
    }
  }
  return fragment;
}

GraphFragment extract_graph_fragments(std::span<const SemanticState> chain, Gateway& gateway,
                                      const CallSite& site, double temperature) {
  if (chain.empty()) throw Error(Errc::invalid_argument, "cannot extract from an empty chain");
  GraphFragment out;
  for (const auto& state : chain) {
    if (trim(state.thought).empty()) continue;
    CallSite here = site;
    if (here.channel_id.empty()) here.channel_id = state.id;
    auto piece = gateway.complete_structured(prompts::extract_graph(state.id, state.thought, temperature),
                                             parse_fragment, here);
    out.append(piece);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Graph construction

std::optional<std::size_t> ThoughtGraph::find(const std::string& normalized) const {
  auto it = std::lower_bound(nodes.begin(), nodes.end(), normalized,
                             [](const GraphNode& n, const std::string& key) { return n.name < key; });
  if (it == nodes.end() || it->name != normalized) return std::nullopt;
  return static_cast<std::size_t>(it - nodes.begin());
}

std::vector<std::vector<std::string>> ThoughtGraph::communities(int level) const {
  std::vector<std::vector<std::string>> out;
  if (level < 0 || level >= levels) return out;
  for (const auto& node : nodes) {
    const int c = node.communities.at(static_cast<std::size_t>(level));
    if (static_cast<std::size_t>(c) >= out.size()) out.resize(static_cast<std::size_t>(c) + 1);
    out[static_cast<std::size_t>(c)].push_back(node.name);
  }
  return out;
}

ThoughtGraph build_graph(std::span<const GraphFragment> fragments) {
  std::map<std::string, GraphNode> nodes;
  struct EdgeAcc {
    GraphEdge edge;
    double strength_sum = 0.0;
    int strength_n = 0;
  };
  std::map<std::pair<std::string, std::string>, EdgeAcc> edges;

  for (const auto& fragment : fragments) {
    std::set<std::string> seen_nodes;
    std::set<std::pair<std::string, std::string>> seen_edges;
    for (const auto& e : fragment.entities) {
      const auto name = normalize_name(e.name);
      if (name.empty()) continue;
      auto [it, fresh] = nodes.try_emplace(name);
      auto& node = it->second;
      if (fresh) {
        node.name = name;
        node.display_name = e.display.empty() ? trim(e.name) : e.display;
      }
      if (node.type.empty()) node.type = e.type;
      if (!e.description.empty() &&
          std::find(node.descriptions.begin(), node.descriptions.end(), e.description) ==
              node.descriptions.end())
        node.descriptions.push_back(e.description);
      if (seen_nodes.insert(name).second) ++node.occurrence_count;
    }
    for (const auto& r : fragment.relations) {
      auto a = normalize_name(r.source), b = normalize_name(r.target);
      if (a.empty() || b.empty() || a == b) continue;
      for (const auto& endpoint : {a, b}) {
        auto [it, fresh] = nodes.try_emplace(endpoint);
        if (fresh) {
          it->second.name = endpoint;
          it->second.display_name = endpoint;
        }
        if (seen_nodes.insert(endpoint).second) ++it->second.occurrence_count;
      }
      if (b < a) std::swap(a, b);
      auto& acc = edges[{a, b}];
      acc.edge.source = a;
      acc.edge.target = b;
      if (!r.description.empty() &&
          std::find(acc.edge.descriptions.begin(), acc.edge.descriptions.end(), r.description) ==
              acc.edge.descriptions.end())
        acc.edge.descriptions.push_back(r.description);
      acc.strength_sum += r.strength;
      ++acc.strength_n;
      if (seen_edges.insert({a, b}).second) ++acc.edge.weight;
    }
  }

  ThoughtGraph graph;
  for (auto& [_, node] : nodes) graph.nodes.push_back(std::move(node));
  for (auto& [_, acc] : edges) {
    acc.edge.strength = acc.strength_sum / acc.strength_n;
    graph.edges.push_back(std::move(acc.edge));
  }
  return graph;
}

// ---------------------------------------------------------------------------
// Clustering

double modularity(const WeightedGraph& g, std::span<const int> membership) {
  if (membership.size() != static_cast<std::size_t>(g.n))
    throw Error(Errc::invalid_argument, "membership size does not match node count");
  std::vector<double> degree(static_cast<std::size_t>(g.n), 0.0);
  double two_m = 0.0;
  std::map<int, double> internal, total;
  for (const auto& [u, v, w] : g.edges) {
    degree[u] += w;
    degree[v] += w;
    two_m += 2 * w;
    if (membership[u] == membership[v]) internal[membership[u]] += 2 * w;
  }
  if (two_m == 0.0) return 0.0;
  for (int i = 0; i < g.n; ++i) total[membership[i]] += degree[i];
  double q = 0.0;
  for (const auto& [c, tot] : total) {
    const double in = internal.count(c) ? internal[c] : 0.0;
    q += in / two_m - (tot / two_m) * (tot / two_m);
  }
  return q;
}

namespace {

/// Adjacency of one aggregation level. adj[i][i] holds twice the internal
/// weight so that degree = row sum.
struct Level {
  std::vector<std::map<int, double>> adj;
  std::vector<int> rep;  // lowest original node index inside each node
  double two_m = 0.0;

  int size() const { return static_cast<int>(adj.size()); }
};

Level level_from(const WeightedGraph& g) {
  Level lv;
  lv.adj.resize(static_cast<std::size_t>(g.n));
  lv.rep.resize(static_cast<std::size_t>(g.n));
  std::iota(lv.rep.begin(), lv.rep.end(), 0);
  for (const auto& [u, v, w] : g.edges) {
    if (u == v) {
      lv.adj[u][u] += 2 * w;
    } else {
      lv.adj[u][v] += w;
      lv.adj[v][u] += w;
    }
    lv.two_m += 2 * w;
  }
  return lv;
}

/// Greedy node moves (to a neighbouring community or to a fresh one) until no
/// move strictly improves modularity. Returns whether anything moved.
bool local_moves(const Level& lv, std::vector<int>& comm, const std::vector<int>& order) {
  const int n = lv.size();
  if (lv.two_m == 0.0) return false;
  std::vector<double> degree(n, 0.0), total(n, 0.0);
  for (int i = 0; i < n; ++i)
    for (const auto& [j, w] : lv.adj[i]) degree[i] += w;
  std::vector<std::multiset<int>> reps(n);
  for (int i = 0; i < n; ++i) {
    total[comm[i]] += degree[i];
    reps[comm[i]].insert(lv.rep[i]);
  }
  std::set<int> empty;
  for (int c = 0; c < n; ++c)
    if (reps[c].empty()) empty.insert(c);
  const int none = n + static_cast<int>(lv.rep.size());
  auto community_rep = [&](int c) { return reps[c].empty() ? none : *reps[c].begin(); };

  constexpr double kTol = 1e-12;
  bool any = false, moved = true;
  while (moved) {
    moved = false;
    for (int i : order) {
      const int from = comm[i];
      std::map<int, double> links;
      for (const auto& [j, w] : lv.adj[i])
        if (j != i) links[comm[j]] += w;
      total[from] -= degree[i];
      reps[from].erase(reps[from].find(lv.rep[i]));
      if (reps[from].empty()) empty.insert(from);

      auto gain = [&](int c) {
        auto it = links.find(c);
        const double k_in = it == links.end() ? 0.0 : it->second;
        return k_in - total[c] * degree[i] / lv.two_m;
      };
      const double stay = gain(from);
      int best = -1;
      double best_gain = 0.0;
      for (const auto& [c, _] : links) {
        if (c == from) continue;
        const double g = gain(c);
        if (best < 0 || g > best_gain + kTol ||
            (std::abs(g - best_gain) <= kTol && community_rep(c) < community_rep(best))) {
          best = c;
          best_gain = g;
        }
      }
      int to = best >= 0 && best_gain > stay + kTol ? best : from;
      const double chosen = to == from ? stay : best_gain;
      // Leaving for an empty community gains exactly zero.
      if (!reps[from].empty() && chosen < -kTol) to = *empty.begin();
      total[to] += degree[i];
      reps[to].insert(lv.rep[i]);
      empty.erase(to);
      if (to != from) {
        comm[i] = to;
        moved = any = true;
      }
    }
  }
  return any;
}

/// Relabels communities 0..k-1 ordered by their lowest representative.
int renumber(const Level& lv, std::vector<int>& comm) {
  std::map<int, int> lowest;
  for (int i = 0; i < lv.size(); ++i) {
    auto [it, fresh] = lowest.try_emplace(comm[i], lv.rep[i]);
    if (!fresh) it->second = std::min(it->second, lv.rep[i]);
  }
  std::vector<std::pair<int, int>> order;
  for (const auto& [c, r] : lowest) order.push_back({r, c});
  std::sort(order.begin(), order.end());
  std::map<int, int> label;
  for (std::size_t k = 0; k < order.size(); ++k) label[order[k].second] = static_cast<int>(k);
  for (auto& c : comm) c = label[c];
  return static_cast<int>(order.size());
}

Level aggregate(const Level& lv, const std::vector<int>& comm, int k) {
  Level next;
  next.adj.resize(static_cast<std::size_t>(k));
  next.rep.assign(static_cast<std::size_t>(k), static_cast<int>(lv.rep.size()) + lv.size());
  next.two_m = lv.two_m;
  for (int i = 0; i < lv.size(); ++i) {
    next.rep[comm[i]] = std::min(next.rep[comm[i]], lv.rep[i]);
    for (const auto& [j, w] : lv.adj[i]) next.adj[comm[i]][comm[j]] += w;
  }
  return next;
}

/// Canonical labels for a partition of the original nodes.
std::vector<int> canonical(std::vector<int> membership) {
  std::map<int, int> label;
  for (auto& c : membership) {
    auto [it, _] = label.try_emplace(c, static_cast<int>(label.size()));
    c = it->second;
  }
  return membership;
}

std::vector<int> visit_order(int n, std::mt19937_64* rng) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  if (rng) std::shuffle(order.begin(), order.end(), *rng);
  return order;
}

/// Full Louvain from a starting partition of the original nodes. Returns the
/// partition after every aggregation pass.
std::vector<std::vector<int>> louvain_passes(const WeightedGraph& g, std::vector<int> start,
                                             std::mt19937_64* rng) {
  std::vector<std::vector<int>> passes;
  Level lv = level_from(g);
  std::vector<int> node_of(static_cast<std::size_t>(g.n));
  std::iota(node_of.begin(), node_of.end(), 0);

  const int k0 = renumber(lv, start);
  if (k0 < lv.size()) {
    node_of = start;
    lv = aggregate(lv, start, k0);
  }
  while (true) {
    std::vector<int> comm(lv.size());
    std::iota(comm.begin(), comm.end(), 0);
    const bool moved = local_moves(lv, comm, visit_order(lv.size(), rng));
    const int k = renumber(lv, comm);
    for (int v = 0; v < g.n; ++v) node_of[v] = comm[node_of[v]];
    passes.push_back(canonical(node_of));
    if (!moved || k == lv.size()) break;
    lv = aggregate(lv, comm, k);
  }
  return passes;
}

/// Kernighan-Lin style sweep on the original graph: repeatedly apply the best
/// single-vertex move among unlocked vertices even when it lowers modularity,
/// lock the vertex, then keep only the best prefix of moves. Repeats while a
/// sweep improves, which lets groups of vertices change community together.
void kl_refine(const WeightedGraph& g, std::vector<int>& membership) {
  const int n = g.n;
  std::vector<std::vector<std::pair<int, double>>> adj(static_cast<std::size_t>(n));
  std::vector<double> degree(static_cast<std::size_t>(n), 0.0);
  double m = 0.0;
  for (const auto& [u, v, w] : g.edges) {
    if (u == v) continue;
    adj[u].push_back({v, w});
    adj[v].push_back({u, w});
    degree[u] += w;
    degree[v] += w;
    m += w;
  }
  if (m == 0.0) return;
  constexpr double kTol = 1e-12;

  struct Move {
    int vertex, to;
  };
  for (int sweep = 0; sweep < 16; ++sweep) {
    std::vector<int> comm = membership;
    std::vector<double> total(static_cast<std::size_t>(n), 0.0);
    std::vector<int> size(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < n; ++i) {
      total[comm[i]] += degree[i];
      ++size[comm[i]];
    }
    std::vector<char> locked(static_cast<std::size_t>(n), 0);
    std::vector<Move> moves;
    double running = 0.0, best = 0.0;
    std::size_t best_prefix = 0;

    for (int step = 0; step < n; ++step) {
      int empty = -1;
      for (int c = 0; c < n && empty < 0; ++c)
        if (size[c] == 0) empty = c;
      int pick = -1, target = -1;
      double pick_delta = 0.0;
      for (int i = 0; i < n; ++i) {
        if (locked[i]) continue;
        std::map<int, double> links;
        for (const auto& [j, w] : adj[i]) links[comm[j]] += w;
        const int from = comm[i];
        const double k_from = links.count(from) ? links[from] : 0.0;
        auto consider = [&](int to, double k_to) {
          if (to == from) return;
          const double d =
              (k_to - k_from) / m - degree[i] * (total[to] - total[from] + degree[i]) / (2 * m * m);
          if (pick < 0 || d > pick_delta + kTol) {
            pick = i;
            target = to;
            pick_delta = d;
          }
        };
        for (const auto& [c, k] : links) consider(c, k);
        if (empty >= 0 && size[from] > 1) consider(empty, 0.0);
      }
      if (pick < 0) break;
      total[comm[pick]] -= degree[pick];
      --size[comm[pick]];
      total[target] += degree[pick];
      ++size[target];
      comm[pick] = target;
      locked[pick] = 1;
      moves.push_back({pick, target});
      running += pick_delta;
      if (running > best + kTol) {
        best = running;
        best_prefix = moves.size();
      }
    }
    if (best_prefix == 0) return;
    for (std::size_t k = 0; k < best_prefix; ++k) membership[moves[k].vertex] = moves[k].to;
  }
}

/// Re-partitions single communities and linked pairs and triples of
/// communities: the union is split into the best two groups (one may be empty)
/// by enumerating every bipartition. Only unions of at most `max_union` nodes are tried. Repeats
/// until no re-partition improves modularity.
void pair_repartition(const WeightedGraph& g, std::vector<int>& membership, int max_union = 12) {
  const int n = g.n;
  std::vector<std::vector<double>> w(static_cast<std::size_t>(n), std::vector<double>(n, 0.0));
  std::vector<double> degree(static_cast<std::size_t>(n), 0.0);
  double two_m = 0.0;
  for (const auto& [u, v, wt] : g.edges) {
    if (u == v) continue;
    w[u][v] += wt;
    w[v][u] += wt;
    degree[u] += wt;
    degree[v] += wt;
    two_m += 2 * wt;
  }
  if (two_m == 0.0) return;
  auto contribution = [&](const std::vector<int>& members) {
    double in = 0.0, tot = 0.0;
    for (std::size_t a = 0; a < members.size(); ++a) {
      tot += degree[members[a]];
      for (std::size_t b = 0; b < members.size(); ++b) in += w[members[a]][members[b]];
    }
    return in / two_m - (tot / two_m) * (tot / two_m);
  };

  for (bool improved = true; improved;) {
    improved = false;
    std::map<int, std::vector<int>> groups;
    for (int v = 0; v < n; ++v) groups[membership[v]].push_back(v);
    std::set<std::pair<int, int>> linked;
    for (const auto& [u, v, wt] : g.edges)
      if (membership[u] != membership[v])
        linked.insert({std::min(membership[u], membership[v]), std::max(membership[u], membership[v])});
    auto adjacent = [&](int x, int y) { return linked.count({std::min(x, y), std::max(x, y)}) > 0; };

    // Candidate sets: every community, every linked pair, every linked triple.
    std::set<std::vector<int>> candidates;
    for (const auto& [c, _] : groups) candidates.insert({c});
    for (const auto& [a, b] : linked) {
      candidates.insert({a, b});
      for (const auto& [c, _] : groups) {
        if (c == a || c == b || !(adjacent(a, c) || adjacent(b, c))) continue;
        std::vector<int> triple{a, b, c};
        std::sort(triple.begin(), triple.end());
        candidates.insert(triple);
      }
    }

    for (const auto& set : candidates) {
      std::vector<int> uni;
      double current = 0.0;
      for (int c : set) {
        uni.insert(uni.end(), groups[c].begin(), groups[c].end());
        current += contribution(groups[c]);
      }
      const int s = static_cast<int>(uni.size());
      if (s < 2 || s > max_union) continue;
      double best = current;
      std::uint32_t best_mask = 0;
      // Node uni[0] always stays on side 0, so each split is seen once.
      for (std::uint32_t mask = 0; mask < (1u << (s - 1)); ++mask) {
        std::vector<int> side0{uni[0]}, side1;
        for (int k = 1; k < s; ++k) ((mask >> (k - 1)) & 1u ? side1 : side0).push_back(uni[k]);
        const double q = contribution(side0) + (side1.empty() ? 0.0 : contribution(side1));
        if (q > best + 1e-12) {
          best = q;
          best_mask = mask | 0x80000000u;
        }
      }
      if (!best_mask) continue;
      int fresh = 0;
      while (groups.count(fresh)) ++fresh;
      const int first = set.front();
      const int other = set.size() > 1 ? set[1] : fresh;
      membership[uni[0]] = first;
      for (int k = 1; k < s; ++k) membership[uni[k]] = ((best_mask >> (k - 1)) & 1u) ? other : first;
      improved = true;
      break;  // groups are stale; rescan
    }
  }
  membership = canonical(membership);
}

/// Louvain followed by rounds of node-level moves on the original graph and
/// re-aggregation, while modularity keeps improving. The node-level rounds
/// free vertices that aggregation locked into the wrong community.
std::vector<std::vector<int>> refined_louvain(const WeightedGraph& g, std::mt19937_64* rng) {
  std::vector<int> singletons(static_cast<std::size_t>(g.n));
  std::iota(singletons.begin(), singletons.end(), 0);
  auto passes = louvain_passes(g, singletons, rng);
  double best_q = modularity(g, passes.back());
  const Level base = level_from(g);
  for (int round = 0; round < 32; ++round) {
    std::vector<int> comm = passes.back();
    local_moves(base, comm, visit_order(g.n, rng));
    if (g.n <= 150) kl_refine(g, comm);
    if (g.n <= 64) pair_repartition(g, comm);
    auto more = louvain_passes(g, comm, rng);
    const double q = modularity(g, more.back());
    if (q <= best_q + 1e-12) break;
    best_q = q;
    passes.push_back(more.back());
  }
  return passes;
}

}  // namespace

std::vector<std::vector<int>> louvain_levels(const WeightedGraph& g, double min_gain) {
  if (g.n == 0) return {};
  std::vector<int> singletons(static_cast<std::size_t>(g.n));
  std::iota(singletons.begin(), singletons.end(), 0);

  // Index order first, then restarts with seeded visiting orders; the best
  // final modularity wins and earlier runs win ties.
  auto passes = refined_louvain(g, nullptr);
  double best_q = modularity(g, passes.back());
  const int restarts = g.n <= 64 ? 24 : g.n <= 512 ? 6 : 0;
  std::mt19937_64 rng(0x5eed);
  for (int r = 0; r < restarts; ++r) {
    auto candidate = refined_louvain(g, &rng);
    const double q = modularity(g, candidate.back());
    if (q > best_q + 1e-12) {
      best_q = q;
      passes = std::move(candidate);
    }
  }

  // Keep a pass only when it adds at least min_gain over the previous one.
  std::vector<std::vector<int>> levels;
  double prev_q = modularity(g, singletons);
  for (const auto& pass : passes) {
    const double q = modularity(g, pass);
    if (levels.empty() || q - prev_q >= min_gain) {
      if (!levels.empty() && pass == levels.back()) continue;
      levels.push_back(pass);
      prev_q = q;
    }
  }
  if (levels.back() != passes.back()) levels.push_back(passes.back());
  if (levels.size() > 1) {
    // Every finer level is intersected with the final optimum so the
    // hierarchy stays nested.
    const auto top = levels.back();
    for (std::size_t l = 0; l + 1 < levels.size(); ++l) {
      std::map<std::pair<int, int>, int> label;
      std::vector<int> meet(static_cast<std::size_t>(g.n));
      for (int v = 0; v < g.n; ++v) {
        auto [it, _] = label.try_emplace({levels[l][v], top[v]}, static_cast<int>(label.size()));
        meet[v] = it->second;
      }
      levels[l] = canonical(meet);
    }
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  }
  return levels;
}

WeightedGraph weighted_view(const ThoughtGraph& graph) {
  WeightedGraph g;
  g.n = static_cast<int>(graph.nodes.size());
  for (const auto& e : graph.edges) {
    auto a = graph.find(e.source), b = graph.find(e.target);
    if (!a || !b) throw Error(Errc::invalid_argument, "edge references unknown node");
    g.edges.emplace_back(static_cast<int>(*a), static_cast<int>(*b), static_cast<double>(e.weight));
  }
  return g;
}

ThoughtGraph cluster_graph(ThoughtGraph graph) {
  if (graph.nodes.empty()) throw Error(Errc::empty_graph, "cannot cluster an empty graph");
  auto levels = louvain_levels(weighted_view(graph));
  std::reverse(levels.begin(), levels.end());  // coarsest first
  graph.levels = static_cast<int>(levels.size());
  for (std::size_t v = 0; v < graph.nodes.size(); ++v) {
    auto& node = graph.nodes[v];
    node.communities.clear();
    for (const auto& level : levels) node.communities.push_back(level[v]);
  }
  graph.summaries.clear();
  return graph;
}

// ---------------------------------------------------------------------------
// Summaries

namespace {

std::string node_text(const GraphNode& node, bool with_summary) {
  std::string out = node.display_name.empty() ? node.name : node.display_name;
  if (!node.type.empty()) out += " (" + node.type + ")";
  if (!node.descriptions.empty()) {
    out += ": ";
    for (std::size_t i = 0; i < node.descriptions.size(); ++i) out += (i ? "; " : "") + node.descriptions[i];
  }
  if (with_summary && !node.summary.empty()) out += "\nCommunity context: " + node.summary;
  return out;
}

std::string community_text(const ThoughtGraph& graph, const std::vector<std::string>& members) {
  std::set<std::string> inside(members.begin(), members.end());
  std::ostringstream out;
  out << "Entities:\n";
  for (const auto& name : members) out << "- " << node_text(graph.nodes[*graph.find(name)], false) << "\n";
  bool header = false;
  for (const auto& e : graph.edges) {
    if (!inside.count(e.source) || !inside.count(e.target)) continue;
    if (!header) out << "Relations:\n";
    header = true;
    out << "- " << e.source << " -- " << e.target;
    if (!e.descriptions.empty()) {
      out << ": ";
      for (std::size_t i = 0; i < e.descriptions.size(); ++i) out << (i ? "; " : "") << e.descriptions[i];
    }
    out << " (seen " << e.weight << "x)\n";
  }
  return prompts::clip(out.str(), 6000);
}

std::string non_empty_text(const ModelResponse& r) {
  auto text = trim(r.text);
  if (text.empty()) malformed("empty summary");
  return text;
}

}  // namespace

std::vector<CommunitySummary> summarize_communities(ThoughtGraph& graph, const std::string& question,
                                                    Gateway& gateway, const CallSite& site,
                                                    double temperature) {
  if (!graph.clustered()) throw Error(Errc::invalid_argument, "graph is not clustered");
  std::vector<CommunitySummary> out;
  std::map<std::vector<std::string>, std::size_t> done;
  for (int level = 0; level < graph.levels; ++level) {
    const auto groups = graph.communities(level);
    for (std::size_t c = 0; c < groups.size(); ++c) {
      CommunitySummary s;
      s.community_id = static_cast<int>(c);
      s.level = level;
      s.member_nodes = groups[c];
      if (auto it = done.find(s.member_nodes); it != done.end()) {
        s.summary_text = out[it->second].summary_text;
        s.embedding = out[it->second].embedding;
      } else {
        auto request = prompts::summarize_community(question, community_text(graph, s.member_nodes),
                                                    temperature);
        request.channel_id = site.channel_id;
        s.summary_text = gateway.complete_structured(std::move(request), non_empty_text, site);
        s.embedding = gateway.embed({s.summary_text}, site).front().values;
        done.emplace(s.member_nodes, out.size());
      }
      out.push_back(std::move(s));
    }
  }
  for (auto& node : graph.nodes) {
    for (const auto& s : out) {
      if (s.level == 0 && s.community_id == node.communities.front()) {
        node.summary = s.summary_text;
        break;
      }
    }
  }
  graph.summaries = out;
  return out;
}

// ---------------------------------------------------------------------------
// DRIFT search

namespace {

struct DriftReply {
  std::string answer;
  std::vector<std::string> follow_ups;
};

DriftReply parse_drift(const ModelResponse& r) {
  DriftReply out;
  if (auto obj = parse_json_object(r.text)) {
    out.answer = obj->value("answer", std::string{});
    for (const char* key : {"follow_ups", "follow_up"})
      if (auto it = obj->find(key); it != obj->end() && it->is_array())
        for (const auto& q : *it) out.follow_ups.push_back(q.get<std::string>());
  } else {
    std::string residue;
    std::istringstream in(r.text);
    std::string line;
    while (std::getline(in, line)) {
      auto kv = parse_key_values(line);
      if (!kv.empty()) {
        const auto& [key, value] = kv.front();
        if (key == "follow_up" || key == "follow-up" || key == "followup") {
          if (!value.empty()) out.follow_ups.push_back(value);
          continue;
        }
        if (key == "answer" && out.answer.empty()) {
          out.answer = value;
          continue;
        }
      }
      residue += line + "\n";
    }
    if (out.answer.empty()) out.answer = trim(residue);
  }
  out.answer = trim(out.answer);
  if (out.answer.empty()) malformed("search reply has no answer");
  return out;
}

EmbeddingVector as_vector(const std::vector<double>& v) { return EmbeddingVector{v}; }

}  // namespace

std::string drift_search(const std::string& question, ThoughtGraph& graph, const DriftConfig& config,
                         Gateway& gateway, const CallSite& site, DriftTrace* trace) {
  if (config.folds < 1 || config.follow_ups < 1)
    throw Error(Errc::invalid_argument, "search needs folds >= 1 and follow_ups >= 1");
  if (trim(question).empty()) throw Error(Errc::empty_question, "question is empty");
  if (graph.nodes.empty()) throw Error(Errc::empty_graph, "cannot search an empty graph");
  if (!graph.summarized()) throw Error(Errc::invalid_argument, "graph has no community summaries");

  DriftTrace local;
  DriftTrace& t = trace ? *trace : local;
  const auto q = gateway.embed({question}, site).front();

  std::vector<std::size_t> unembedded;
  std::vector<std::string> unembedded_text;
  for (std::size_t i = 0; i < graph.summaries.size(); ++i) {
    if (graph.summaries[i].embedding.empty()) {
      unembedded.push_back(i);
      unembedded_text.push_back(graph.summaries[i].summary_text);
    }
  }
  if (!unembedded.empty()) {
    auto vectors = gateway.embed(unembedded_text, site);
    for (std::size_t k = 0; k < unembedded.size(); ++k)
      graph.summaries[unembedded[k]].embedding = vectors[k].values;
  }

  // Global primer: community summaries ranked by similarity to the question.
  std::vector<std::pair<double, std::size_t>> ranked;
  std::set<std::string> seen_text;
  for (std::size_t i = 0; i < graph.summaries.size(); ++i) {
    const auto& s = graph.summaries[i];
    if (!seen_text.insert(s.summary_text).second) continue;
    ranked.push_back({cosine(q, as_vector(s.embedding)), i});
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  t.primer_context.clear();
  for (std::size_t k = 0; k < ranked.size() && k < config.top_communities; ++k)
    t.primer_context.push_back(graph.summaries[ranked[k].second].summary_text);

  auto primer = gateway.complete_structured(
      prompts::drift_primer(question, t.primer_context, config.follow_ups, config.temperature),
      parse_drift, site);
  ++t.answer_calls;
  t.primer_answer = primer.answer;

  // Node embeddings for local retrieval.
  std::vector<std::string> missing_text;
  std::vector<std::size_t> missing;
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    if (graph.nodes[i].embedding.empty()) {
      missing.push_back(i);
      missing_text.push_back(node_text(graph.nodes[i], true));
    }
  }
  if (!missing.empty()) {
    auto vectors = gateway.embed(missing_text, site);
    for (std::size_t k = 0; k < missing.size(); ++k) graph.nodes[missing[k]].embedding = vectors[k].values;
  }

  std::string current = primer.answer;
  std::vector<std::string> queue = primer.follow_ups;
  if (queue.size() > static_cast<std::size_t>(config.follow_ups)) queue.resize(config.follow_ups);
  for (int fold = 0; fold < config.folds && !queue.empty(); ++fold) {
    const auto query_vectors = gateway.embed(queue, site);
    std::vector<std::string> next;
    for (std::size_t k = 0; k < queue.size(); ++k) {
      std::vector<std::pair<double, std::size_t>> near;
      for (std::size_t i = 0; i < graph.nodes.size(); ++i)
        near.push_back({cosine(query_vectors[k], as_vector(graph.nodes[i].embedding)), i});
      std::stable_sort(near.begin(), near.end(),
                       [](const auto& a, const auto& b) { return a.first > b.first; });
      std::vector<std::string> texts;
      for (std::size_t r = 0; r < near.size() && r < config.top_nodes; ++r)
        texts.push_back(node_text(graph.nodes[near[r].second], true));

      auto refined = gateway.complete_structured(
          prompts::drift_fold(question, current, queue[k], texts, config.follow_ups, config.temperature),
          parse_drift, site);
      ++t.answer_calls;
      t.follow_ups_asked.push_back(queue[k]);
      t.findings.push_back(refined.answer);
      current = refined.answer;
      for (auto& f : refined.follow_ups) next.push_back(std::move(f));
    }
    if (next.size() > static_cast<std::size_t>(config.follow_ups)) next.resize(config.follow_ups);
    queue = std::move(next);
  }

  auto request = prompts::drift_reduce(question, t.primer_answer, t.findings, config.temperature);
  auto answer = gateway.complete_structured(std::move(request), non_empty_text, site);
  ++t.answer_calls;
  return answer;
}

// ---------------------------------------------------------------------------
// More thinking

std::vector<double> MoreThinkingConfig::chain_temperatures() const {
  if (!temperatures.empty()) return temperatures;
  std::vector<double> out;
  for (int i = 0; i < M; ++i) out.push_back(M == 1 ? 0.9 : 0.5 + 0.8 * i / (M - 1));
  return out;
}

void validate(const MoreThinkingConfig& cfg) {
  std::vector<ConfigError::Field> bad;
  if (cfg.M < 1) bad.push_back({"M", "must be >= 1"});
  if (cfg.f < 1) bad.push_back({"f", "must be >= 1"});
  if (cfg.u < 1) bad.push_back({"u", "must be >= 1"});
  if (!cfg.temperatures.empty() && cfg.temperatures.size() != static_cast<std::size_t>(cfg.M))
    bad.push_back({"temperatures", "needs exactly M entries"});
  for (double t : cfg.temperatures)
    if (!(t >= 0 && t <= 2)) bad.push_back({"temperatures", "entries must lie in [0, 2]"});
  if (!bad.empty()) throw ConfigError(std::move(bad));
}

void to_json(json& j, const MoreThinkingConfig& c) {
  j = json{{"M", c.M}, {"f", c.f}, {"u", c.u}, {"temperatures", c.chain_temperatures()}};
}

MoreThinkingConfig merge_more_thinking(MoreThinkingConfig base, const json& block) {
  if (!block.is_object()) return base;
  try {
    if (block.contains("M")) base.M = block.at("M").get<int>();
    if (block.contains("f")) base.f = block.at("f").get<int>();
    if (block.contains("u")) base.u = block.at("u").get<int>();
    if (block.contains("temperatures")) base.temperatures = block.at("temperatures").get<std::vector<double>>();
  } catch (const json::exception&) {
    throw ConfigError({ConfigError::Field{"more_thinking", "wrong type"}});
  }
  return base;
}

MoreThinkingResult more_thinking(const std::string& question, const ChannelParams& params,
                                 const MoreThinkingConfig& cfg, CognitiveLoop& loop, RunContext& run,
                                 const std::string& chain_suffix) {
  validate(cfg);
  validate(params);
  if (trim(question).empty()) throw Error(Errc::empty_question, "question is empty");

  const auto temps = cfg.chain_temperatures();
  const auto M = static_cast<std::size_t>(cfg.M);
  std::vector<std::optional<ChannelRun>> chains(M);
  std::vector<std::exception_ptr> errors(M);

  auto run_chain = [&](std::size_t i) {
    ChannelParams p = params;
    p.temperature = temps[i];
    try {
      chains[i] = loop.run_channel(question, p, run, "m" + std::to_string(i + 1) + chain_suffix, false);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers =
      std::min<std::size_t>(M, static_cast<std::size_t>(loop.config().max_parallel_channels));
  if (workers <= 1) {
    for (std::size_t i = 0; i < M; ++i) run_chain(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < M; i = next++) run_chain(i);
      });
    for (auto& t : pool) t.join();
  }

  std::exception_ptr first_error;
  MoreThinkingResult result;
  for (std::size_t i = 0; i < M; ++i) {
    if (!errors[i]) {
      ++result.chains_succeeded;
      continue;
    }
    if (run.run_terminated()) std::rethrow_exception(errors[i]);
    if (!first_error) first_error = errors[i];
    json payload = {{"chain", "m" + std::to_string(i + 1) + chain_suffix}, {"fatal", false}};
    try {
      std::rethrow_exception(errors[i]);
    } catch (const Error& e) {
      payload["error"] = to_string(e.code());
      payload["message"] = e.what();
    } catch (const std::exception& e) {
      payload["error"] = "Internal";
      payload["message"] = e.what();
    }
    run.emit("", EventKind::failure, std::move(payload));
  }
  if (result.chains_succeeded == 0) std::rethrow_exception(first_error);

  auto& gateway = loop.gateway();
  const CallSite site{&run, "", nullptr, false};
  const double eval_t = loop.config().eval_temperature;

  std::vector<GraphFragment> fragments;
  std::string fallback_answer;
  for (std::size_t i = 0; i < M; ++i) {
    if (!chains[i]) continue;
    auto states = chains[i]->result.visited;
    const auto& answer = chains[i]->answer;
    if (std::none_of(states.begin(), states.end(), [&](const auto& s) { return s.id == answer.id; }))
      states.push_back(answer);
    if (fallback_answer.empty()) fallback_answer = answer.thought;
    CallSite chain_site = site;
    chain_site.channel_id = "m" + std::to_string(i + 1) + chain_suffix;
    fragments.push_back(extract_graph_fragments(states, gateway, chain_site, eval_t));
  }

  result.graph = build_graph(fragments);
  if (result.graph.nodes.empty()) {
    run.emit("", EventKind::graph, json{{"graph", graph_to_json(result.graph, false)}, {"empty", true}});
    result.answer = fallback_answer;
  } else {
    result.graph = cluster_graph(std::move(result.graph));
    summarize_communities(result.graph, question, gateway, site, eval_t);
    run.emit("", EventKind::graph, json{{"graph", graph_to_json(result.graph, false)}});
    DriftConfig drift;
    drift.folds = cfg.f;
    drift.follow_ups = cfg.u;
    drift.temperature = eval_t;
    result.answer = drift_search(question, result.graph, drift, gateway, site, &result.drift);
  }

  run.emit("", EventKind::answer,
           json{{"state_id", nullptr},
                {"answer", result.answer},
                {"confidence", nullptr},
                {"mode", "more_thinking"},
                {"chains_succeeded", result.chains_succeeded},
                {"budget_exhausted", false}});
  return result;
}

// ---------------------------------------------------------------------------
// Export

json graph_to_json(const ThoughtGraph& graph, bool include_embeddings) {
  auto joined = [](const std::vector<std::string>& parts) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? "; " : "") + parts[i];
    return out;
  };
  json nodes = json::array(), edges = json::array(), communities = json::array();
  for (const auto& n : graph.nodes) {
    json node = {{"name", n.name},
                 {"display_name", n.display_name},
                 {"type", n.type},
                 {"description", joined(n.descriptions)},
                 {"descriptions", n.descriptions},
                 {"occurrence_count", n.occurrence_count},
                 {"communities", n.communities},
                 {"summary", n.summary}};
    if (include_embeddings && !n.embedding.empty()) node["embedding"] = n.embedding;
    nodes.push_back(std::move(node));
  }
  for (const auto& e : graph.edges) {
    edges.push_back({{"source", e.source},
                     {"target", e.target},
                     {"description", joined(e.descriptions)},
                     {"descriptions", e.descriptions},
                     {"weight", e.weight},
                     {"strength", e.strength}});
  }
  for (int level = 0; level < graph.levels; ++level) {
    const auto groups = graph.communities(level);
    for (std::size_t c = 0; c < groups.size(); ++c) {
      json entry = {{"id", "L" + std::to_string(level) + "-C" + std::to_string(c)},
                    {"level", level},
                    {"community_id", c},
                    {"members", groups[c]},
                    {"summary", ""}};
      for (const auto& s : graph.summaries) {
        if (s.level == level && s.community_id == static_cast<int>(c)) {
          entry["summary"] = s.summary_text;
          if (include_embeddings) entry["embedding"] = s.embedding;
        }
      }
      communities.push_back(std::move(entry));
    }
  }
  return json{{"schema_version", kSchemaVersion},
              {"levels", graph.levels},
              {"nodes", std::move(nodes)},
              {"edges", std::move(edges)},
              {"communities", std::move(communities)}};
}

ThoughtGraph graph_from_json(const json& j) {
  ThoughtGraph g;
  try {
    g.levels = j.value("levels", 0);
    for (const auto& n : j.at("nodes")) {
      GraphNode node;
      node.name = normalize_name(n.at("name").get<std::string>());
      node.display_name = n.value("display_name", node.name);
      node.type = n.value("type", std::string{});
      node.descriptions = n.value("descriptions", std::vector<std::string>{});
      if (node.descriptions.empty() && !n.value("description", std::string{}).empty())
        node.descriptions.push_back(n.at("description").get<std::string>());
      node.occurrence_count = n.value("occurrence_count", 1);
      node.communities = n.value("communities", std::vector<int>{});
      node.summary = n.value("summary", std::string{});
      node.embedding = n.value("embedding", std::vector<double>{});
      if (static_cast<int>(node.communities.size()) != g.levels)
        throw Error(Errc::parse_error, "node '" + node.name + "' lacks a community per level");
      g.nodes.push_back(std::move(node));
    }
    std::sort(g.nodes.begin(), g.nodes.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    for (std::size_t i = 1; i < g.nodes.size(); ++i)
      if (g.nodes[i].name == g.nodes[i - 1].name)
        throw Error(Errc::parse_error, "duplicate node '" + g.nodes[i].name + "'");
    for (const auto& e : j.value("edges", json::array())) {
      GraphEdge edge;
      edge.source = normalize_name(e.at("source").get<std::string>());
      edge.target = normalize_name(e.at("target").get<std::string>());
      if (edge.target < edge.source) std::swap(edge.source, edge.target);
      edge.descriptions = e.value("descriptions", std::vector<std::string>{});
      edge.weight = e.value("weight", 1);
      edge.strength = e.value("strength", 1.0);
      if (!g.find(edge.source) || !g.find(edge.target))
        throw Error(Errc::parse_error, "edge references an unknown node");
      g.edges.push_back(std::move(edge));
    }
    std::sort(g.edges.begin(), g.edges.end(), [](const auto& a, const auto& b) {
      return std::tie(a.source, a.target) < std::tie(b.source, b.target);
    });
    for (const auto& c : j.value("communities", json::array())) {
      CommunitySummary s;
      s.level = c.at("level").get<int>();
      s.community_id = c.at("community_id").get<int>();
      s.member_nodes = c.value("members", std::vector<std::string>{});
      s.summary_text = c.value("summary", std::string{});
      s.embedding = c.value("embedding", std::vector<double>{});
      if (!s.summary_text.empty()) g.summaries.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw Error(Errc::parse_error, std::string("graph file: ") + e.what());
  }
  return g;
}

}  // namespace clio
