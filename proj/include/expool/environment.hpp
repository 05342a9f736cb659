#pragma once

#include "expool/core.hpp"

#include <optional>

namespace expool {

// What the workflow and acquisition need from the outside world. Image refs are opaque.
class Environment {
public:
    virtual ~Environment() = default;

    virtual const ToolRegistry& registry() const = 0;
    virtual const MetricSet& metrics(Preference preference) const = 0;

    // `attempt` counts perception calls for this image within one run, so a re-perception
    // after rollback may answer differently while staying deterministic.
    virtual DegradationSet perceive(const ImageRef& image, int attempt) = 0;

    // nullopt when the tool fails to run.
    virtual std::optional<ImageRef> apply_tool(const ImageRef& image, const ToolId& tool,
                                               const DegradationType& degradation) = 0;

    // Degradations still visibly present: members of `perceived` that remain, plus any
    // present degradation perception missed.
    virtual DegradationSet reflect(const ImageRef& image, const DegradationSet& perceived) = 0;

    virtual MetricVector score(const ImageRef& image, Preference preference) = 0;
};

}  // namespace expool
