#pragma once

#include <map>
#include <tuple>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clio/cognitive_loop.hpp"
#include "clio/gateway.hpp"
#include "clio/run_context.hpp"
#include "clio/types.hpp"

namespace clio {

struct FragmentEntity {
  std::string name;  // normalized
  std::string type;
  std::string description;
  std::string display;  // spelling as extracted
};

struct FragmentRelation {
  std::string source;  // normalized
  std::string target;  // normalized
  std::string description;
  double strength = 1.0;
};

/// Entities and relations read from one chain of thought. Entity names are
/// unique within a fragment and every relation endpoint is a listed entity.
struct GraphFragment {
  std::vector<FragmentEntity> entities;
  std::vector<FragmentRelation> relations;

  bool has_entity(const std::string& normalized) const;
  /// Adds or merges an entity (descriptions joined with "; ").
  void add_entity(FragmentEntity e);
  /// Adds a relation, creating missing endpoints with empty descriptions.
  void add_relation(FragmentRelation r);
  void append(const GraphFragment& other);
};

/// Case-fold, trim, collapse inner whitespace.
std::string normalize_name(std::string_view name);

/// Parses an extraction reply ("entity: n | type | desc", "relation: s | t |
/// desc | strength" lines, or the equivalent JSON object).
GraphFragment parse_fragment(const ModelResponse& response);

struct GraphNode {
  std::string name;          // normalized, unique
  std::string display_name;  // first spelling seen
  std::string type;
  std::vector<std::string> descriptions;
  int occurrence_count = 0;
  /// Community id per hierarchy level; index 0 is the coarsest level.
  std::vector<int> communities;
  std::string summary;
  std::vector<double> embedding;
};

struct GraphEdge {
  std::string source;  // source < target
  std::string target;
  std::vector<std::string> descriptions;
  int weight = 0;
  double strength = 0.0;  // mean over merged occurrences
};

struct CommunitySummary {
  int community_id = 0;
  int level = 0;
  std::vector<std::string> member_nodes;
  std::string summary_text;
  std::vector<double> embedding;
};

struct ThoughtGraph {
  std::vector<GraphNode> nodes;  // sorted by name
  std::vector<GraphEdge> edges;  // sorted by (source, target)
  int levels = 0;
  std::vector<CommunitySummary> summaries;

  std::optional<std::size_t> find(const std::string& normalized) const;
  bool clustered() const noexcept { return levels > 0; }
  bool summarized() const noexcept { return clustered() && !summaries.empty(); }
  /// Members of each community at `level`, community ids in index order.
  std::vector<std::vector<std::string>> communities(int level) const;
};

/// One structured call per non-empty thought, fragments concatenated.
/// Throws Error(invalid_argument) for an empty chain.
GraphFragment extract_graph_fragments(std::span<const SemanticState> chain, Gateway& gateway,
                                      const CallSite& site = {}, double temperature = 0.0);

/// Node and edge occurrence counts are the number of fragments mentioning
/// them. Self-loops are dropped.
ThoughtGraph build_graph(std::span<const GraphFragment> fragments);

// --- Clustering -----------------------------------------------------------

/// Weighted undirected graph on nodes 0..n-1 used by the clustering code.
struct WeightedGraph {
  int n = 0;
  std::vector<std::tuple<int, int, double>> edges;
};

/// Newman modularity of `membership` (community label per node). Zero for a
/// graph without edges.
double modularity(const WeightedGraph& g, std::span<const int> membership);

/// Louvain partitions, finest first. Nodes are visited in index order and
/// ties go to the community with the lowest-index member, so the result is a
/// pure function of the input. Labels are renumbered by lowest member.
std::vector<std::vector<int>> louvain_levels(const WeightedGraph& g, double min_gain = 1e-6);

WeightedGraph weighted_view(const ThoughtGraph& graph);

/// Assigns communities for every level. Throws Error(empty_graph).
ThoughtGraph cluster_graph(ThoughtGraph graph);

// --- Summaries and search -------------------------------------------------

/// One summarize call and one embed call per distinct community. Summaries are
/// written back to member nodes (coarsest level). Returns the new summaries.
std::vector<CommunitySummary> summarize_communities(ThoughtGraph& graph, const std::string& question,
                                                    Gateway& gateway, const CallSite& site = {},
                                                    double temperature = 0.0);

struct DriftConfig {
  int folds = 2;
  int follow_ups = 3;
  std::size_t top_communities = 5;
  std::size_t top_nodes = 8;
  double temperature = 0.0;
};

struct DriftTrace {
  std::vector<std::string> primer_context;  // community summaries, best first
  std::string primer_answer;
  std::vector<std::string> follow_ups_asked;
  std::vector<std::string> findings;
  int answer_calls = 0;
};

/// Global primer over community summaries, then `folds` rounds of local
/// refinement over retrieved nodes, then a reduce call. Node embeddings are
/// computed on first use. Throws Error(invalid_argument) when folds or
/// follow_ups < 1 and Error(empty_graph) when there is nothing to search.
std::string drift_search(const std::string& question, ThoughtGraph& graph, const DriftConfig& config,
                         Gateway& gateway, const CallSite& site = {}, DriftTrace* trace = nullptr);

struct MoreThinkingConfig {
  int M = 5;
  int f = 2;
  int u = 3;
  std::vector<double> temperatures;  // empty: evenly spaced in [0.5, 1.3]

  std::vector<double> chain_temperatures() const;
};

void validate(const MoreThinkingConfig& cfg);
void to_json(json& j, const MoreThinkingConfig& c);
MoreThinkingConfig merge_more_thinking(MoreThinkingConfig base, const json& block);

struct MoreThinkingResult {
  std::string answer;
  ThoughtGraph graph;
  int chains_succeeded = 0;
  DriftTrace drift;
};

/// M independent loop runs (chain roots "m1".."mM", plus `chain_suffix`), one joint graph over all
/// visited states, DRIFT answer. Failed chains are logged and skipped while at
/// least one succeeds. Graph-phase calls are logged but not budgeted.
MoreThinkingResult more_thinking(const std::string& question, const ChannelParams& params,
                                 const MoreThinkingConfig& cfg, CognitiveLoop& loop,
                                 RunContext& run, const std::string& chain_suffix = {});

/// Export schema: {schema_version, levels, nodes[], edges[], communities[]}.
json graph_to_json(const ThoughtGraph& graph, bool include_embeddings = true);
ThoughtGraph graph_from_json(const json& j);

}  // namespace clio
