#pragma once

#include "expool/environment.hpp"
#include "expool/oracles.hpp"
#include "expool/pool.hpp"

#include <optional>
#include <string>
#include <vector>

namespace expool {

struct WorkflowConfig {
    Preference preference = Preference::Fidelity;
    int max_rollbacks = 8;
    int max_invocations = 40;
    GuidanceOptions guidance;

    void validate() const;
};

enum class TraceStatus { Success, Exhausted };

std::string_view to_string(TraceStatus status);

struct ExecutionStep {
    int step = 0;
    int pass = 0;
    DegradationType degradation;
    ToolId tool;
    std::optional<ImageRef> output;  // nullopt when the tool failed

    bool operator==(const ExecutionStep&) const = default;
};

struct ReflectionRecord {
    int step = 0;
    int pass = 0;
    DegradationSet unresolved;

    bool operator==(const ReflectionRecord&) const = default;
};

struct RollbackRecord {
    int step = 0;
    EventKind kind = EventKind::OrderRollback;
    std::string revised;  // e.g. "order: dark -> rain => rain -> dark"

    bool operator==(const RollbackRecord&) const = default;
};

struct WorkflowTrace {
    ImageRef image;
    DegradationSet perceived;  // the set the final plan was built for
    GuidanceLevel level = GuidanceLevel::None;
    std::vector<ExecutionStep> executions;
    std::vector<ReflectionRecord> reflections;
    std::vector<RollbackRecord> rollbacks;
    int o_rollbacks = 0;
    int t_rollbacks = 0;
    int invocations = 0;
    TraceStatus status = TraceStatus::Success;
    ImageRef final_image;
    std::string reason;
    std::vector<std::string> warnings;
    History history;

    int total_rollbacks() const { return o_rollbacks + t_rollbacks; }
    Json to_json() const;
    static WorkflowTrace from_json(const Json& doc);
    bool operator==(const WorkflowTrace&) const = default;
};

// Perception -> Planning -> Execution -> Reflection -> (Rollback)*. Each rollback revises the
// removal order while untried orders remain and only then the tool of the first unresolved
// degradation; every pass restarts from the original image.
WorkflowTrace run_workflow(const ImageRef& image, Environment& env, const ExperiencePool& pool,
                           LanguageOracle* language, EncoderOracle* encoder, const WorkflowConfig& config);

// Literal event-sequence check: no tool rollback while the current degradation set still has
// an order that was never executed. Returns a description of the first violation.
std::optional<std::string> rollback_order_violation(const WorkflowTrace& trace);

}  // namespace expool
