#pragma once

#include <string>
#include <vector>

#include "clio/model.hpp"
#include "clio/run_context.hpp"
#include "clio/types.hpp"

/// Request builders for every model call the engine makes. Each request is
/// tagged with its purpose and the calling channel so scripted fixtures can
/// route on them.
namespace clio::prompts {

inline constexpr const char* kCompletionTool = "complete_thought_channel";

ToolDescriptor completion_tool();

ModelRequest confidence(const SemanticState& state, const std::vector<OpenUncertainty>& open,
                        const std::vector<std::string>& guidance, double temperature);

ModelRequest coverage_generate(const SemanticState& state, const std::vector<std::string>& guidance,
                               double temperature);

ModelRequest coverage_update(const SemanticState& state, const CoverageChecklist& checklist,
                             const std::vector<std::string>& guidance, double temperature);

ModelRequest completion(const SemanticState& state, const std::vector<std::string>& guidance,
                        double temperature);

ModelRequest optimize(const SemanticState& parent, const std::string& child_id,
                      const std::vector<std::string>& unresolved, int child_index, int child_count,
                      const std::vector<std::string>& guidance, double temperature);

/// Fresh context for a child channel: question, the child's own persona and
/// focus, and a bounded summary of the parent's thought. Nothing else.
ModelRequest sample(const std::string& question, const std::string& child_id,
                    const ChannelParams& child_params, const std::string& parent_summary,
                    int depth, const std::vector<std::string>& guidance);

ModelRequest synthesize(const SemanticState& parent, const std::string& synth_id,
                        const std::vector<SemanticState>& results,
                        const std::vector<std::string>& guidance);

ModelRequest extract_graph(const std::string& channel_id, const std::string& thought,
                           double temperature);

ModelRequest summarize_community(const std::string& question, const std::string& community_text,
                                 double temperature);

ModelRequest drift_primer(const std::string& question, const std::vector<std::string>& summaries,
                          int follow_ups, double temperature);

ModelRequest drift_fold(const std::string& question, const std::string& current_answer,
                        const std::string& follow_up, const std::vector<std::string>& node_texts,
                        int follow_ups, double temperature);

ModelRequest drift_reduce(const std::string& question, const std::string& primer_answer,
                          const std::vector<std::string>& findings, double temperature);

ModelRequest extract_uncertainty(const std::string& transcript, double temperature);

ModelRequest judge(const std::string& question, const std::string& prediction,
                   const std::string& gold, double temperature);

/// Truncates on a UTF-8 boundary and marks the cut.
std::string clip(const std::string& text, std::size_t max_chars);

}  // namespace clio::prompts
