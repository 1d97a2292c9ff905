#include "clio/prompts.hpp"

#include <sstream>

namespace clio::prompts {

namespace {

ModelRequest make(std::string purpose, std::string channel, double temperature,
                  std::string system, std::string user) {
  ModelRequest r;
  r.purpose = std::move(purpose);
  r.channel_id = std::move(channel);
  r.temperature = temperature;
  r.messages.push_back({"system", std::move(system)});
  r.messages.push_back({"user", std::move(user)});
  return r;
}

std::string guidance_block(const std::vector<std::string>& guidance) {
  if (guidance.empty()) return {};
  std::string out = "\n\nGuidance from the supervising scientist (follow it):\n";
  for (const auto& g : guidance) out += "- " + g + "\n";
  return out;
}

std::string persona_line(const ChannelParams& p) {
  std::string out;
  if (!p.persona.empty()) out += "Persona: " + p.persona + "\n";
  if (!p.focus.empty()) out += "Focus: " + p.focus + "\n";
  return out;
}

}  // namespace

std::string clip(const std::string& text, std::size_t max_chars) {
  if (text.size() <= max_chars) return text;
  std::size_t cut = max_chars;
  while (cut > 0 && (static_cast<unsigned char>(text[cut]) & 0xC0) == 0x80) --cut;
  return text.substr(0, cut) + " [...]";
}

ToolDescriptor completion_tool() {
  return {kCompletionTool,
          "Declare this thought channel complete. Call only when the question is fully "
          "answered within this channel.",
          json{{"type", "object"},
               {"properties", {{"rationale", {{"type", "string"}}}}},
               {"required", json::array({"rationale"})}}};
}

ModelRequest confidence(const SemanticState& state, const std::vector<OpenUncertainty>& open,
                        const std::vector<std::string>& guidance, double temperature) {
  std::ostringstream user;
  user << "Question:\n" << state.question << "\n\nCurrent thought:\n" << state.thought << "\n";
  if (!open.empty()) {
    user << "\nOpen uncertainties raised earlier on this line of reasoning:\n";
    for (const auto& u : open) user << "- " << u.id << " (level " << u.level << "): " << u.description << "\n";
  }
  user << guidance_block(guidance);
  user << "\nRate how confident you are that the current thought correctly and completely "
          "answers the question. Reply with lines:\n"
          "confidence: <number in [0,1]>\n"
          "uncertainty: <level in [0,1]> | <what you are still unsure about>   (zero or more)\n"
          "addressed: <id of an open uncertainty this thought resolves>        (zero or more)";
  return make("confidence", state.id, temperature,
              "You are a rigorous scientific reviewer who reports calibrated self-confidence.",
              user.str());
}

ModelRequest coverage_generate(const SemanticState& state, const std::vector<std::string>& guidance,
                               double temperature) {
  std::ostringstream user;
  user << "Question:\n" << state.question << "\n\nCurrent thought:\n" << state.thought
       << guidance_block(guidance)
       << "\n\nList the sub-questions a complete answer must address, and mark which ones the "
          "current thought already addresses. One per line:\n"
          "- [x] <sub-question addressed>\n- [ ] <sub-question not yet addressed>";
  return make("coverage", state.id, temperature,
              "You plan scientific reasoning by decomposing questions into checkable parts.",
              user.str());
}

ModelRequest coverage_update(const SemanticState& state, const CoverageChecklist& checklist,
                             const std::vector<std::string>& guidance, double temperature) {
  std::ostringstream user;
  user << "Question:\n" << state.question << "\n\nCurrent thought:\n" << state.thought
       << "\n\nChecklist so far:\n";
  for (const auto& item : checklist.items)
    user << "- [" << (item.addressed ? 'x' : ' ') << "] " << item.description << "\n";
  user << guidance_block(guidance)
       << "\nReturn the checklist with updated marks, in the same format, one item per line.";
  return make("coverage", state.id, temperature,
              "You plan scientific reasoning by decomposing questions into checkable parts.",
              user.str());
}

ModelRequest completion(const SemanticState& state, const std::vector<std::string>& guidance,
                        double temperature) {
  std::ostringstream user;
  user << "Question:\n" << state.question << "\n\nChannel transcript:\n" << state.thought << "\n";
  if (state.checklist) {
    user << "\nCoverage checklist:\n";
    for (const auto& item : state.checklist->items)
      user << "- [" << (item.addressed ? 'x' : ' ') << "] " << item.description << "\n";
  }
  user << guidance_block(guidance)
       << "\nIf this channel has fully answered the question, call " << kCompletionTool
       << ". Otherwise explain in one sentence what is still missing.";
  auto r = make("completion", state.id, temperature,
                "You decide whether a line of reasoning is finished.", user.str());
  r.tools.push_back(completion_tool());
  return r;
}

ModelRequest optimize(const SemanticState& parent, const std::string& child_id,
                      const std::vector<std::string>& unresolved, int child_index, int child_count,
                      const std::vector<std::string>& guidance, double temperature) {
  std::ostringstream user;
  user << "Question:\n" << parent.question << "\n\nCurrent thought:\n" << parent.thought
       << "\n\nCurrent strategy:\n"
       << "persona: " << parent.params.persona << "\nfocus: " << parent.params.focus
       << "\ntemperature: " << parent.params.temperature << "\n";
  if (!unresolved.empty()) {
    user << "\nUnresolved uncertainties:\n";
    for (const auto& u : unresolved) user << "- " << u << "\n";
  }
  user << guidance_block(guidance) << "\nYou are configuring exploration channel " << child_index
       << " of " << child_count
       << ". Propose the persona, focus and temperature that channel should use to make "
          "progress, preferably by resolving an open uncertainty. Reply with lines "
          "'persona: ...', 'focus: ...', 'temperature: ...'; omit a line to keep it unchanged.";
  return make("optimize", child_id, temperature,
              "You tune the strategy of a recursive scientific reasoner.", user.str());
}

ModelRequest sample(const std::string& question, const std::string& child_id,
                    const ChannelParams& child_params, const std::string& parent_summary,
                    int depth, const std::vector<std::string>& guidance) {
  std::ostringstream user;
  user << "Question:\n" << question << "\n\n" << persona_line(child_params)
       << "\nWhere the reasoning stands (summary of the parent channel):\n" << parent_summary
       << guidance_block(guidance)
       << "\n\nContinue the reasoning one step from here (exploration depth " << depth
       << "). State a concrete hypothesis or refinement, the evidence for it, and a tentative "
          "answer.";
  std::string system = "You are an expert scientist reasoning carefully, step by step.";
  if (!child_params.persona.empty()) system += " Adopt the persona: " + child_params.persona + ".";
  return make("sample", child_id, child_params.temperature, std::move(system), user.str());
}

ModelRequest synthesize(const SemanticState& parent, const std::string& synth_id,
                        const std::vector<SemanticState>& results,
                        const std::vector<std::string>& guidance) {
  std::ostringstream user;
  user << "Question:\n" << parent.question << "\n\nContext:\n" << parent.thought
       << "\n\nFindings from independent exploration channels:\n";
  for (std::size_t i = 0; i < results.size(); ++i) {
    user << "[" << (i + 1) << "] ";
    if (results[i].confidence_c) user << "(confidence " << *results[i].confidence_c << ") ";
    user << results[i].thought << "\n";
  }
  user << guidance_block(guidance)
       << "\nWeigh the findings against each other and synthesize one answer. End with a line "
          "'Final answer: <answer>'.";
  return make("synthesize", synth_id, parent.params.temperature,
              "You synthesize independent lines of scientific reasoning into one answer.",
              user.str());
}

ModelRequest extract_graph(const std::string& channel_id, const std::string& thought,
                           double temperature) {
  std::string user =
      "Extract the entities and relationships in the following reasoning.\n\nText:\n" + thought +
      "\n\nReply with lines:\n"
      "entity: <name> | <type> | <short description>\n"
      "relation: <source name> | <target name> | <description> | <strength in (0,1]>";
  return make("extract", channel_id, temperature,
              "You build knowledge graphs from scientific text.", std::move(user));
}

ModelRequest summarize_community(const std::string& question, const std::string& community_text,
                                 double temperature) {
  std::string user = "Question under study:\n" + question +
                     "\n\nCommunity of related entities and relations:\n" + community_text +
                     "\n\nWrite a concise report of what this community says about the question.";
  return make("summarize", "", temperature,
              "You summarize clusters of a knowledge graph for retrieval.", std::move(user));
}

ModelRequest drift_primer(const std::string& question, const std::vector<std::string>& summaries,
                          int follow_ups, double temperature) {
  std::ostringstream user;
  user << "Question:\n" << question << "\n\nCommunity reports, most relevant first:\n";
  for (std::size_t i = 0; i < summaries.size(); ++i) user << "[" << (i + 1) << "] " << summaries[i] << "\n";
  user << "\nGive a preliminary answer and " << follow_ups
       << " follow-up queries that would sharpen it. Reply with lines:\n"
          "answer: <preliminary answer>\nfollow_up: <query>   (one line per query)";
  return make("drift_primer", "", temperature,
              "You answer questions from a knowledge graph, globally first, then locally.",
              user.str());
}

ModelRequest drift_fold(const std::string& question, const std::string& current_answer,
                        const std::string& follow_up, const std::vector<std::string>& node_texts,
                        int follow_ups, double temperature) {
  std::ostringstream user;
  user << "Question:\n" << question << "\n\nCurrent answer:\n" << current_answer
       << "\n\nFollow-up query:\n" << follow_up << "\n\nRetrieved graph entities:\n";
  for (const auto& t : node_texts) user << "- " << t << "\n";
  user << "\nRefine the answer using the retrieved entities and propose " << follow_ups
       << " new follow-up queries. Reply with lines:\n"
          "answer: <refined answer>\nfollow_up: <query>   (one line per query)";
  return make("drift_fold", "", temperature,
              "You answer questions from a knowledge graph, globally first, then locally.",
              user.str());
}

ModelRequest drift_reduce(const std::string& question, const std::string& primer_answer,
                          const std::vector<std::string>& findings, double temperature) {
  std::ostringstream user;
  user << "Question:\n" << question << "\n\nPreliminary answer:\n" << primer_answer
       << "\n\nRefinements from local searches:\n";
  for (std::size_t i = 0; i < findings.size(); ++i) user << "[" << (i + 1) << "] " << findings[i] << "\n";
  user << "\nMerge everything into one final response. End with a line 'Final answer: <answer>'.";
  return make("drift_reduce", "", temperature,
              "You answer questions from a knowledge graph, globally first, then locally.",
              user.str());
}

ModelRequest extract_uncertainty(const std::string& transcript, double temperature) {
  std::string user =
      "Read the reasoning transcript below in order. For every point where the reasoner "
      "expresses uncertainty, report its level and what it is about, and which earlier "
      "uncertainties (by 0-based index in your list) it resolves.\n\nTranscript:\n" +
      transcript +
      "\n\nReply with one line per uncertainty, in order:\n"
      "uncertainty: <level in [0,1]> | <description> | addresses: <comma-separated indices or empty>";
  return make("uncertainty_extract", "", temperature,
              "You analyse reasoning transcripts for expressed uncertainty.", std::move(user));
}

ModelRequest judge(const std::string& question, const std::string& prediction,
                   const std::string& gold, double temperature) {
  std::string user = "Question:\n" + question + "\n\nReference answer:\n" + gold +
                     "\n\nResponse:\n" + prediction +
                     "\n\nIs the response's final answer equivalent to the reference? Reply "
                     "'correct: yes' or 'correct: no'.";
  return make("judge", "", temperature, "You grade answers against a reference strictly.",
              std::move(user));
}

}  // namespace clio::prompts
